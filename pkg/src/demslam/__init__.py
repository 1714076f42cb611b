"""DEM-based SLAM back-end toolkit.

Converts submap point clouds into planar-canonical height-map tiles,
retrieves covisible submaps by descriptor voting over an approximate
nearest-neighbor index, and corrects trajectory drift with a Sim(3)
pose-graph optimizer.
"""

__version__ = "0.1.0"

from .sim3 import Sim3, sim3_exp, sim3_log, umeyama_sim3

__all__ = ["Sim3", "sim3_exp", "sim3_log", "umeyama_sim3", "__version__"]
