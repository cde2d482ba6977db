# Analyzers package
