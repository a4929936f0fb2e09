"""Density-ratio weights and covariate balance"""
