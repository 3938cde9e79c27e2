"""
Tests Package

Unit and acceptance tests for Kernel Warehouse.
"""
