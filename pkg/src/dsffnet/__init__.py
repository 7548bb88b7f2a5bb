"""Pose transfer between 3D meshes with a dual-side-channel feature-fusion network."""

__version__ = "0.1.0"
