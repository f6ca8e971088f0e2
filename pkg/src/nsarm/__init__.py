"""Next-scale autoregressive modeling for real-world image super-resolution."""
