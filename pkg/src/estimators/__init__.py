"""Kaplan-Meier, Cox and bootstrap estimators with delayed entry"""
