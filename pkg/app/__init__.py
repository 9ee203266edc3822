# Passicert - local stability and passivity certificates
