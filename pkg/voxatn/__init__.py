# VoxAtnNet point-cloud presentation attack detection pipeline
__version__ = "0.1.0"
