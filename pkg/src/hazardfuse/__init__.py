"""Multi-modal (colour + depth) trip-hazard segmentation at desk scale."""

__version__ = "0.1.0"

# Channel layout of every two-class score map.
TRIP = 0
NON_TRIP = 1
