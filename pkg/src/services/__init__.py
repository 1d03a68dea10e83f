"""Services package - data, models, attacks, evaluation, checkpoints and figures"""
