"""The five workload implementations and their pipeline wirings."""
