"""Privacy-preserving multi-object tracking toolkit."""
