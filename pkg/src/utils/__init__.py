"""Utilities package - attention math, metrics, imaging, storage and formatting"""
