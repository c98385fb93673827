"""Training support: reverse-mode autodiff, trainable network, toy loop."""
