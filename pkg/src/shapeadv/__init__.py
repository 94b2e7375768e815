"""Shape-aware adversarial attacks on 3D point-cloud classifiers, desk scale."""

__version__ = "0.1.0"
