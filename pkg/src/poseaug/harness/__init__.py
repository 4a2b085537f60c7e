from .dataset import PoseDataset, PoseRecord, load_dataset, save_dataset
from .synthetic import SyntheticConfig, generate_synthetic

__all__ = ["PoseDataset", "PoseRecord", "SyntheticConfig", "generate_synthetic", "load_dataset",
           "save_dataset"]
