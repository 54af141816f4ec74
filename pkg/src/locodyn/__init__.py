"""Differentiable leg-plus-torso dynamics for learning forces and joint torques from motion.

Modules
-------
body        segment geometry, kinematics and anthropometry
dynamics    generalized inertia, forces and the damped state derivative
forward     Euler forward-dynamics layer with parameter sensitivities
inverse     Newton-Euler residual of motion and contact wrenches
trajectory  window polynomials
dataset     window samples, file IO, mirroring and noise
synth       synthetic gait sequences and oracle windows
network     the regression network
training    losses, training modes and experiments
metrics     RMSE / relative RMSE and sequence evaluation
plotting    figure export
cli         command-line entry point
"""

__version__ = "0.1.0"
