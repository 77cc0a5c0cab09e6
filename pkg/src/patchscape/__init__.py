"""patchscape: bounded curved-surface patches from organized range data.

Fits paraboloid, sphere, cylinder, and plane patches with quantified
uncertainty to noisy point neighborhoods, validates them, and maintains a
sparse spatial map of patches over a moving local volume.
"""

from patchscape import pose  # noqa: F401

__version__ = "0.1.0"
