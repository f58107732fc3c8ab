"""Contact-implicit trajectory optimization and MPC for a planar quadruped."""
