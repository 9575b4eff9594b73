"""Fit one synthetic image with the training-free refinement alone, starting from h(0)."""
import numpy as np

from handfit import refine
from handfit.estimator import Evidence2D, initial_params
from handfit.losses import GridDescriptor
from handfit.mesh import skeleton_from_params
from handfit.toy import gen_toy_model
from handfit.refine import RefineConfig
from handfit.synth import AugmentConfig, generate_record, procedural_background, sample_params

assets = gen_toy_model(0)
rng = np.random.default_rng(5)
rec = generate_record(sample_params(assets, AugmentConfig(), rng), assets, procedural_background(rng), rng)
desc = GridDescriptor()
h0 = initial_params(assets)
res = refine.testing_refine(rec.image, Evidence2D(desc(rec.image, rec.mask), rec.j2d), h0,
                            RefineConfig(iterations=100), assets, desc)


def err(h):
    return np.linalg.norm(skeleton_from_params(h, assets) - rec.j3d, axis=1).mean()


print(f"objective {res.trace[0][1]:.4f} -> {res.trace[-1][1]:.4f}")
print(f"mean joint error {err(h0):.4f} -> {err(res.h):.4f}")
