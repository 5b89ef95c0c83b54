from .flowio import (
    decode_flo,
    encode_flo,
    read_flo,
    read_image,
    read_kitti_png,
    write_flo,
    write_image,
    write_kitti_png,
)
from .store import load_dataset, save_dataset
from .synthetic import (
    SceneSpec,
    SequenceSample,
    Sprite,
    SuiteSpec,
    generate,
    generate_suite,
    sample_scene,
    suite_preset,
)
from .viz import flow_to_color

__all__ = [
    "SceneSpec",
    "SequenceSample",
    "Sprite",
    "SuiteSpec",
    "decode_flo",
    "encode_flo",
    "flow_to_color",
    "generate",
    "generate_suite",
    "load_dataset",
    "read_flo",
    "read_image",
    "read_kitti_png",
    "sample_scene",
    "save_dataset",
    "suite_preset",
    "write_flo",
    "write_image",
    "write_kitti_png",
]
