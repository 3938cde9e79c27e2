"""
Utils Package

Logging helpers and small shared utilities for Kernel Warehouse.
"""
