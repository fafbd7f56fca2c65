"""Deep-learning detection of stereotypical motor movements from wearable IMU data."""

__version__ = "0.1.0"
