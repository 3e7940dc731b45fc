"""desktwin: grounds a monocular scene observation and an object-pose
trajectory into a simulatable scene model, then trains a residual policy that
turns the trajectory into feasible end-effector commands."""

__version__ = "0.1.0"
