"""Economic MPC laboratory."""
