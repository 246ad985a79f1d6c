"""Command-line harness: verification suites, training, benchmarks and inspection."""
