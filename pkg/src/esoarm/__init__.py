"""Robust safety filtering and disturbance rejection for closed-architecture arms."""
