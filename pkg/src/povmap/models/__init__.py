"""
Learned models: gradient boosted trees over place features and the image
classifier over place tiles.
"""
