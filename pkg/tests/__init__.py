"""
Test package for qtree.
"""
