# Day filtering and unreported-meal relabelling of glucose grids
