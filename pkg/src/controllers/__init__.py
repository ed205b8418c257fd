"""
Controllers package for RotIR

This package contains the orchestration layer:
- PipelineController: sweep, synth, identify, evaluate and report commands
- JobRunner: bounded concurrent execution of per-ear and per-segment jobs
"""

from .job_runner import Job, JobRunner, JobStatus, default_workers
from .pipeline_controller import PipelineController, exit_code_for

__all__ = [
    'Job',
    'JobRunner',
    'JobStatus',
    'default_workers',
    'PipelineController',
    'exit_code_for'
]
