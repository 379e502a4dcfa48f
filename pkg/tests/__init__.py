"""
Test suite for VibroSP
"""
