"""
When do views pin down the shape?
=================================

A sphere and the same sphere with a small bump are indistinguishable from
views that never see the bump. The smallest eigenvalue of the F-matrix Gram
matrix, restricted to directions that keep the code weights summing to one,
stays at zero until a view faces the bump.
"""

import numpy as np

from crisp import LinearBlend, degeneracy_report
from crisp.shapes import build_F_matrix, bump_basis
from crisp.simulator import SceneConfig, make_scene

basis = bump_basis()
decoder = LinearBlend(basis)
dirs = [[-1, 0, 0], [-1, 0.3, 0.2], [0, 1, 0], [1, 0, 0]]
frames = make_scene(basis, decoder, SceneConfig(n_points=150, n_views=4, gt_alpha=[0.5, 0.5], view_dirs=dirs, seed=0))

seen = []
for f, d in zip(frames, dirs):
    seen.append(f.gt_Z)
    rep = degeneracy_report(build_F_matrix(np.vstack(seen), basis), restrict="simplex")
    print("views %d (latest from %-15s)  lambda_min %.2e  degenerate %s" % (len(seen), d, rep.lambda_min, rep.is_degenerate))

# without the restriction the Gram matrix is singular for any set of views:
# the true code is itself a null vector of F for points on the decoded surface
F = build_F_matrix(np.vstack(seen), basis)
print("unrestricted lambda_min %.2e, |F alpha| %.1e" % (degeneracy_report(F).lambda_min, np.linalg.norm(F @ [0.5, 0.5])))
