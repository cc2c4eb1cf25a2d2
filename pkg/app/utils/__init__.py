"""
Utility modules: logging, errors, grid cache and tree persistence.
"""
