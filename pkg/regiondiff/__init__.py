"""Segment images without labels by training a factorized diffusion model"""
