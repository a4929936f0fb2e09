"""Survival cohort model, risk sets and CSV IO"""
