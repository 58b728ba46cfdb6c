"""
alignlab
"""
