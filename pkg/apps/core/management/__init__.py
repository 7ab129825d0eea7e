# Management module 