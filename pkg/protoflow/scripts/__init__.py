"""
Protoflow Scripts

This package contains the CLI runner for the translation pipeline.
"""
