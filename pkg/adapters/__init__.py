# Adapters package initialization
