# Raw device events -> validated 5-minute glucose grid
