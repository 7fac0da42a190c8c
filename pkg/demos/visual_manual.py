"""
A visual manual for one prediction
==================================

Builds a 4-class dataset in which only part 1 carries class information,
trains the localizer, the gain and confidence tables and a full classifier,
and renders the manual for the first test creature into ./manual_demo.
Open the HTML file in a browser; the JSON twin holds the same content.
"""

from pscnn.interpretation import Interpreter, build_tables, render_manual
from pscnn.synthetic import generate, single_part_spec, split
from pscnn.training import classifier_defaults, locate, localizer_defaults, train_classifier, train_localizer

train, test = split(generate(single_part_spec(), 240, seed=7), (2 / 3, 1 / 3), seed=7)
fcn = train_localizer(train, test, localizer_defaults()).model
locations = (locate(fcn, train), locate(fcn, test))

cfg = classifier_defaults()
# bbox-only, bbox + each part, and part-only models: roughly a minute
tables = build_tables(train, test, fcn, cfg, locations)
for c in range(train.num_classes):
    print(f"class {c}: parts by one-vs-most gain {tables.gain.ranked_parts(c)}")

model = train_classifier(train, test, fcn, (1, 2, 3, 4, 5), cfg, locations=locations).model
interp = Interpreter(model, train, locations[0], tables)
entry, _, _ = render_manual(test.images[0], locations[1][0], interp, K=3, R=3, T=3, sample_id=test.ids[0], out_dir="manual_demo")
print(f"{test.ids[0]}: predicted class {entry.predicted}, true class {int(test.labels[0])}")
for comp in entry.comparisons:
    print(f"  vs class {comp['class']}:", [(p["part"], p["confidence"]) for p in comp["parts"]])
