"""Cross-modal teacher-student captioning for 3D object scenes, on a numpy autodiff core."""

__version__ = "0.1.0"
