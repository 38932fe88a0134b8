"""Grid-world store simulation: customer trajectory generators, trajectory
analytics and impulse-product placement."""

from .layout import Basket, Category, Layout, LayoutError, ProductProfile, load_layout, reposition
from .trajectory import Action, Trajectory

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Basket",
    "Category",
    "Layout",
    "LayoutError",
    "ProductProfile",
    "Trajectory",
    "load_layout",
    "reposition",
]
