"""
Certification and self-training
===============================

Corrected outputs are certified when nearly all of their SDF residuals are
small. An estimator with a systematic pose and code bias is then trained
only on certified pseudo-labels, and its bias shrinks epoch by epoch.
"""

import numpy as np

from crisp import LinearBlend, bcd_correct, oc_certificate
from crisp.selftrain import BiasedOracleEstimator, self_train_epoch
from crisp.shapes import asymmetric_basis
from crisp.simulator import PerturbationModel, SceneConfig, make_scene, synth_estimates

basis = asymmetric_basis(4)
decoder = LinearBlend(basis)

# small and large estimate errors: only the first is repaired well enough
frame = make_scene(basis, decoder, SceneConfig(n_points=200, noise_sigma=1e-3, seed=2))[0]
for deg in (5, 60):
    Z, h = synth_estimates(frame, PerturbationModel(rot_deg=deg, trans_m=0.02, code_perturb=0.1, seed=0))
    res = bcd_correct([(frame.X, Z)], h, decoder)
    print("%2d deg perturbation -> certified: %s" % (deg, oc_certificate(res.Z_hat, res.code, decoder)))

data = [make_scene(basis, decoder, SceneConfig(n_points=200, noise_sigma=1e-3, seed=5), i) for i in range(6)]
axis = np.array([1.0, 2.0, -1.0]) / np.sqrt(6.0)
est = BiasedOracleEstimator(np.radians(5) * axis, np.zeros(3), np.array([0.1, -0.05, 0.0, -0.05]), seed=0)
print("epoch  certified  bias norm")
print("    0          -     %.4f" % est.bias_norm())
for epoch in range(1, 5):
    stats = self_train_epoch(est, data, "bcd", decoder, basis, lr_z=1e-3, lr_h=0.05, epoch=epoch)
    print("%5d     %6.2f     %.4f" % (epoch, stats.certified_fraction, stats.bias_norm))
