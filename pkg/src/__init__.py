"""Cross-Task Attack toolkit - Main package"""
