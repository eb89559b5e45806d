# Vehicle trajectory generation lab: road-network environment, demand simulator,
# adversarial imitation trainer, baselines and evaluation
from .cli import main
from . import models

# Layers, bottom-up
from .network import RoadNetwork, build_chain, build_grid, build_two_route
from .data import Dataset, Trajectory, load_csv, save_csv, split
from .sim import generate_demand
from .trajgail import train, generate
from .evaluation import dataset_scores, distribution_report, js_distance

__version__ = "0.1.0"

__all__ = [
    # Main entry point
    'main',

    # Models
    'models',

    # Environment and data
    'RoadNetwork',
    'build_chain',
    'build_grid',
    'build_two_route',
    'Dataset',
    'Trajectory',
    'load_csv',
    'save_csv',
    'split',

    # Simulation, training, evaluation
    'generate_demand',
    'train',
    'generate',
    'dataset_scores',
    'distribution_report',
    'js_distance',
]
