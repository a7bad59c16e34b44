"""Show, ask, attend, and answer: attention-based visual question answering."""
