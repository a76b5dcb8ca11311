"""HeteroSeg: brain tumor segmentation networks that keep working when MR sequences are missing."""

__version__ = "1.0.0"
