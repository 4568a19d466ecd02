"""Tree-structured articulated pose estimation with single and combined parts."""

__version__ = "0.1.0"
