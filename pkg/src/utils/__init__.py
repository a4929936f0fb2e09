"""Settings, errors, atomic IO, provenance and plots"""
