# Desk-scale reproduction drivers
