"""Grid-based episodic spatial memory pipeline bindings.

The heavy lifting lives in the C++ core; this package re-exports the
operations most useful from Python: projection geometry, bilinear sampling,
BFS planning, subgoal templates, evaluation metrics, and the
finite-difference gradient verifier.
"""

from escape._core import (  # noqa: F401
    NUM_CATEGORIES,
    __version__,
    bce,
    bfs_path,
    bilinear_sample,
    camera_projection_from_pose,
    category_names,
    compute_metrics,
    expand_subgoals,
    gen_room,
    miou,
    pillar_reference_points,
    project_point,
    render_semantic,
    verify_gradients,
)
