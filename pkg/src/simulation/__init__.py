"""Simulation study: data generation, calibration and the estimator harness"""
