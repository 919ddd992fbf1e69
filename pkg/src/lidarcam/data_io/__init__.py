from .config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from .kitti import MalformedFileError, MissingFileError, load_kitti_frame, load_kitti_sequence, write_kitti_frame
from .sample import Sample
from .synthetic import DegenerateSceneError, SyntheticSceneSpec, generate_synthetic

__all__ = [
    "ConfigError",
    "DegenerateSceneError",
    "MalformedFileError",
    "MissingFileError",
    "RunConfig",
    "Sample",
    "SyntheticSceneSpec",
    "config_from_dict",
    "dump_config",
    "generate_synthetic",
    "load_config",
    "load_kitti_frame",
    "load_kitti_sequence",
    "write_kitti_frame",
]
