"""
Protoflow Tests

This package contains the pytest suite for every pipeline stage.
"""
