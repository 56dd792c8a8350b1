"""Globally consistent volumetric mapping with SDF submaps."""
