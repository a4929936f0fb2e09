"""End-to-end analysis and simulation workflows"""
