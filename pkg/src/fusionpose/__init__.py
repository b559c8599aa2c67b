"""3D pedestrian pose estimation from sparse LiDAR and 2D keypoints.

Modules: ``model`` (domain types), ``geometry``, ``synth`` (synthetic scenes),
``pseudolabel``, ``nn`` (numpy network with explicit backprop), ``losses``,
``train``, ``evaluation``, ``dataio`` and ``cli``.
"""

__version__ = "0.1.0"
