"""Monocular semantic scene completion with triplane deformable attention and a CVAE latent."""
