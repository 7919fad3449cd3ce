"""Deterministic simulator for decentralized federated learning with
sharpness-aware local updates"""
