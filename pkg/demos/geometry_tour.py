"""
Receptive fields of the two reference trunks
============================================

Every grid coordinate the localizer predicts maps back to an input pixel
through the cumulative stride and the centre offset of its unit. This script
prints both tables and converts a few grid cells to pixels.
"""

from pscnn.geometry import caffenet_geometry, crop_receptive_field, desk_geometry, format_rf_table, receptive_field

# the full-size trunk: 454-pixel inputs give a 27x27 conv5 grid
big = caffenet_geometry()
print(format_rf_table(big))
print("a 6x6 conv5 crop sees", crop_receptive_field(big, 6), "input pixels")

# dropping conv padding keeps rf and stride but moves unit (0, 0)
print("offset padded:", receptive_field(big)[2], "unpadded:", receptive_field(caffenet_geometry(padded=False))[2])

# the desk trunk used everywhere else: 64-pixel inputs, 13x13 grid
desk = desk_geometry()
print()
print(format_rf_table(desk))
rf, stride, offset = receptive_field(desk)
for h, w in [(0, 0), (6, 6), (12, 3)]:
    print(f"grid ({h}, {w}) -> pixel (x={offset + stride * w:.0f}, y={offset + stride * h:.0f})")
