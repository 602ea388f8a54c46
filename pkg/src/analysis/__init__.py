# Attribution, impact curves and learned-dynamics conformance
