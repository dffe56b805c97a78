"""Provider profiling with size-adaptive empirical null distributions."""
