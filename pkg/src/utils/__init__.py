"""
Utilities package for RotIR

This package contains utility modules and helper functions:
- Logging configuration and management
- Content hashing of arrays and files
"""
