"""Re-identification attacks on eye-tracking data and a vault + federated defense."""

__version__ = "0.1.0"

FEATURE_NAMES = (
    "gaze_x",
    "gaze_y",
    "left_pupil_dia",
    "right_pupil_dia",
    "head_x",
    "head_y",
    "head_z",
)
