from .config import ConfigError, ExperimentConfig, parse_config
from .data import Dataset, DatasetError, DatasetSpec, gen_synthetic, load_cifar10, load_dataset, read_cifar10_file
from .experiment import records_to_csv, run_experiment, train_base, train_to_plateau
