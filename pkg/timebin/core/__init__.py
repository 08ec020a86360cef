"""Pure computation modules: tags, simulation, sync, discretization, analysis."""
