"""Robust adaptive control of LPV systems with unmatched uncertainties.

Modules
-------
lpv        parameter-dependent matrices, scheduling domains, plant models
sdp, lmi   LMI solving, stability / peak-to-peak gain certificates, baseline gains
realize    state-space realizations of the closed-loop maps
synthesis  feedforward synthesis for unmatched-uncertainty attenuation
runtime    predictor, piecewise-constant estimator and control law
simulate   fixed-step closed-loop, reference and ideal simulations
bounds     analytic constants and performance bounds
design     end-to-end design pipeline
f16, bench F-16 short-period benchmark
"""

__version__ = "0.1.0"
