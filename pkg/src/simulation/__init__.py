# Hovorka glucose-insulin simulator
