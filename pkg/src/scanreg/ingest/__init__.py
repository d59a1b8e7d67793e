from .backproject import OrientedPoints, backproject, backproject_grid  # noqa: F401
from .frames import (  # noqa: F401
    DEPTH_MODES,
    MAX_DEPTH_M,
    DepthFrame,
    IngestError,
    Intrinsics,
    decode_depth,
    encode_depth,
    gray_sibling_path,
    load_depth,
    load_intrinsics,
    load_manifest,
    save_depth,
    save_gray,
    save_intrinsics,
)
from .synthetic import (  # noqa: F401
    DriftModel,
    Room,
    SceneError,
    SyntheticScene,
    ground_truth_poses,
    load_scene,
    look_at_pose,
    perturb_trajectory,
    plant_benchmark,
    scene_from_json,
    scene_rectangles,
    synth_scene,
)
