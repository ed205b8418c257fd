"""
Models package for RotIR

This package contains the numerical core and its data:
- signals: perfect sweep and excitation bank
- scenario: rotation, IR trajectories and recording synthesis
- identifiers: LMS, NLMS, JO-NLMS and Kalman streaming identifiers
- dnn_model / trainer: gated recurrent identifier and its training
- metrics: NM, LSD, ITD, time windowing and OTF compensation
- config_manager / artifact_store: configuration and run artifacts
"""
