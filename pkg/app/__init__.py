"""
Quantization trees and reflected BSDE pricing of American options.
"""

__version__ = '1.0.0'
