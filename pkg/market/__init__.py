"""
Market model, penalty integrands and constraint sets
"""
