"""Regenerate src/hsdlab/data/default_catalog.json.

The description bank for each abnormality is composed from a handful of
hand-written clinical facts and opening phrases, so the file stays
reproducible without an online language model.
"""

import itertools
import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "hsdlab" / "data" / "default_catalog.json"

NEGATION_CUES = [
    "no", "not", "without", "absent", "negative for", "no evidence of",
    "free of", "ruled out", "rule out", "excluded",
]

OPENINGS = [
    "{full} is",
    "{full} ({name}) is",
    "The term {full} refers to",
    "In pediatric cardiology, {full} describes",
    "{name} denotes",
]

# name, full name, definition, synonyms, facts
ENTITIES = [
    ("ASD", "atrial septal defect",
     "An atrial septal defect is a congenital heart defect in which an opening in the wall between the "
     "left and right atria lets blood pass between the two upper chambers of the heart.",
     ["atrial septal defect", "atrial septal defects", "asd", "interatrial septal defect",
      "interatrial communication"],
     ["a congenital opening in the interatrial septum",
      "a hole in the wall that separates the two upper chambers of the heart",
      "a defect that lets oxygenated blood cross from the left atrium into the right atrium",
      "a lesion heard as a soft systolic ejection murmur at the upper left sternal border",
      "a cause of right atrial and right ventricular volume overload",
      "an atrial level communication with fixed splitting of the second heart sound"]),
    ("VSD", "ventricular septal defect",
     "A ventricular septal defect is a congenital opening in the septum between the left and right "
     "ventricles that allows blood to flow between the two lower chambers of the heart.",
     ["ventricular septal defect", "ventricular septal defects", "vsd",
      "interventricular septal defect", "interventricular communication"],
     ["a congenital opening in the interventricular septum",
      "a hole in the wall that separates the two lower chambers of the heart",
      "a defect that lets blood cross from the left ventricle into the right ventricle",
      "a lesion heard as a harsh holosystolic murmur at the lower left sternal border",
      "the most common congenital heart defect in children",
      "a ventricular level communication that can raise pulmonary blood flow"]),
    ("PVS", "pulmonary valve stenosis",
     "Pulmonary valve stenosis is a narrowing of the pulmonary valve that obstructs blood flow from "
     "the right ventricle into the pulmonary artery.",
     ["pulmonary valve stenosis", "pulmonary stenosis", "pulmonic stenosis",
      "pulmonary valvular stenosis", "pvs"],
     ["a narrowing of the valve between the right ventricle and the pulmonary artery",
      "an obstruction to right ventricular outflow at the pulmonary valve",
      "a valve lesion heard as a systolic ejection murmur at the upper left sternal border",
      "a condition that raises right ventricular pressure",
      "a stiff or fused pulmonary valve that opens incompletely",
      "a congenital outflow obstruction often accompanied by an ejection click"]),
    ("PDA", "patent ductus arteriosus",
     "Patent ductus arteriosus is a persistent opening of the fetal vessel connecting the aorta and the "
     "pulmonary artery that fails to close after birth.",
     ["patent ductus arteriosus", "persistent ductus arteriosus", "pda", "patent ductus"],
     ["a fetal vessel between the aorta and pulmonary artery that stays open after birth",
      "a persistent ductal connection between the aorta and the pulmonary artery",
      "a lesion heard as a continuous machine-like murmur below the left clavicle",
      "a vascular communication that carries blood from the aorta into the pulmonary circulation",
      "a common finding in premature infants",
      "a failure of the ductus to close in the first days of life"]),
    ("PFO", "patent foramen ovale",
     "A patent foramen ovale is a small flap-like opening between the atria that remains after the "
     "fetal foramen ovale fails to seal following birth.",
     ["patent foramen ovale", "pfo", "persistent foramen ovale"],
     ["a flap-like opening between the atria left over from fetal circulation",
      "an unsealed foramen ovale in the interatrial septum",
      "a small interatrial passage that usually causes no symptoms",
      "a remnant of the fetal route that bypassed the lungs",
      "a tunnel between the atria that may open when right atrial pressure rises",
      "a common atrial finding in newborns"]),
    ("AS", "aortic stenosis",
     "Aortic stenosis is a narrowing of the aortic valve opening that restricts blood flow from the "
     "left ventricle into the aorta.",
     ["aortic stenosis", "aortic valve stenosis", "aortic valvular stenosis"],
     ["a narrowing of the valve between the left ventricle and the aorta",
      "an obstruction to left ventricular outflow at the aortic valve",
      "a valve lesion heard as a crescendo-decrescendo systolic murmur at the right upper sternal border",
      "a condition that raises left ventricular pressure",
      "a stiff or fused aortic valve that opens incompletely",
      "an outflow obstruction that may radiate to the carotid arteries"]),
    ("PH", "pulmonary hypertension",
     "Pulmonary hypertension is an abnormally high blood pressure in the arteries of the lungs that "
     "increases the workload of the right side of the heart.",
     ["pulmonary hypertension", "pulmonary arterial hypertension", "elevated pulmonary pressure"],
     ["an abnormally high blood pressure in the pulmonary arteries",
      "a rise in pressure within the lung circulation",
      "a condition that strains the right ventricle",
      "a state often signalled by a loud pulmonic component of the second heart sound",
      "a complication of long-standing left-to-right shunting",
      "a disorder of the pulmonary vascular bed with raised resistance"]),
    ("Prolapse", "valve prolapse",
     "Valve prolapse is the abnormal bulging of one or more valve leaflets backward into an upper "
     "chamber of the heart during ventricular contraction.",
     ["prolapse", "valve prolapse", "mitral valve prolapse", "leaflet prolapse", "mvp"],
     ["a backward bulging of a valve leaflet during ventricular contraction",
      "a floppy valve leaflet that billows into the atrium",
      "a leaflet abnormality often heard as a mid-systolic click",
      "a valve condition that may be followed by a late systolic murmur",
      "a displacement of the leaflets beyond the valve annulus",
      "a structural valve change that can lead to leakage"]),
    ("Regurgitation", "valvular regurgitation",
     "Valvular regurgitation is the backward leakage of blood through a heart valve that does not "
     "close tightly.",
     ["regurgitation", "valvular regurgitation", "valve regurgitation", "insufficiency",
      "valvular insufficiency", "backflow"],
     ["a backward leakage of blood through an incompletely closing valve",
      "a failure of a heart valve to seal during its closed phase",
      "a valve leak that returns blood to the chamber it came from",
      "a lesion heard as a blowing murmur over the affected valve",
      "a cause of volume overload in the receiving chamber",
      "an incompetent valve that lets blood flow the wrong way"]),
    ("Shunt", "shunt",
     "A cardiac shunt is an abnormal pattern of blood flow through a communication that diverts blood "
     "between the systemic and pulmonary circulations.",
     ["shunt", "shunting", "left-to-right shunt", "right-to-left shunt", "bidirectional shunt"],
     ["an abnormal flow of blood through a communication between heart chambers or vessels",
      "a diversion of blood between the systemic and pulmonary circulations",
      "a flow pattern that can run left to right or right to left",
      "a hemodynamic consequence of septal defects or a patent duct",
      "a mixing of oxygenated and deoxygenated blood",
      "a flow that bypasses the normal circulatory route"]),
    ("Hypertrophy", "ventricular hypertrophy",
     "Hypertrophy is a thickening of the heart muscle wall, most often of a ventricle, in response to "
     "increased pressure or workload.",
     ["hypertrophy", "ventricular hypertrophy", "left ventricular hypertrophy",
      "right ventricular hypertrophy", "myocardial hypertrophy", "hypertrophic"],
     ["a thickening of the ventricular muscle wall",
      "an increase in myocardial mass in response to pressure load",
      "a muscular adaptation to a chronically increased workload",
      "a stiff thickened ventricle that fills less easily in diastole",
      "a change that may reduce the size of the ventricular cavity",
      "a remodeling of the heart muscle seen as thick walls on echocardiography"]),
    ("Dilation", "chamber dilation",
     "Dilation is an enlargement of a heart chamber or great vessel beyond its normal size, usually "
     "from volume overload or weakened muscle.",
     ["dilation", "dilatation", "dilated", "enlargement", "enlarged", "chamber dilation"],
     ["an enlargement of a heart chamber beyond its normal size",
      "a widening of a cardiac chamber or great vessel",
      "a stretching of the chamber wall under volume overload",
      "a structural change that increases chamber diameter",
      "a remodeling that can follow long-standing valve leakage",
      "an expanded cavity seen as increased dimensions on echocardiography"]),
]

# Further abnormalities the extractor knows about; rare in the corpus, so the
# schema builder normally drops them.
EXTRA_ENTITIES = [
    ("Effusion", "pericardial effusion",
     "A pericardial effusion is an abnormal collection of fluid in the sac surrounding the heart.",
     ["pericardial effusion", "effusion"],
     ["an abnormal collection of fluid in the pericardial sac",
      "fluid accumulating around the heart",
      "a pericardial finding that can compress the heart when large"]),
    ("Coarctation", "coarctation of the aorta",
     "Coarctation of the aorta is a congenital narrowing of a segment of the aorta.",
     ["coarctation of the aorta", "aortic coarctation", "coarctation"],
     ["a congenital narrowing of a segment of the aorta",
      "a constriction of the aortic arch or isthmus",
      "a lesion that raises blood pressure in the upper body"]),
    ("BAV", "bicuspid aortic valve",
     "A bicuspid aortic valve is an aortic valve with two leaflets instead of the usual three.",
     ["bicuspid aortic valve", "bav"],
     ["an aortic valve formed with two leaflets instead of three",
      "a congenital malformation of the aortic valve",
      "a valve that may later become stenotic or leaky"]),
]


def compose_bank(name, full, facts, limit=100):
    bank = []
    # fact pairs outermost so consecutive entries differ in opening phrase
    for (a, b), opening in itertools.product(itertools.permutations(facts, 2), OPENINGS):
        head = opening.format(name=name, full=full)
        text = f"{head[0].upper()}{head[1:]} {a}, and it is {b}."
        if text not in bank:
            bank.append(text)
    return bank[:limit]


def entity_doc(index, spec):
    name, full, definition, synonyms, facts = spec
    return {
        "entity_id": index,
        "canonical_name": name,
        "full_name": full,
        "definition_text": definition,
        "synonyms": synonyms,
        "negation_cues": NEGATION_CUES,
        "description_bank": compose_bank(name, full, facts),
    }


def main():
    entities = [entity_doc(i, spec) for i, spec in enumerate(ENTITIES)]
    extras = [entity_doc(len(ENTITIES) + i, spec) for i, spec in enumerate(EXTRA_ENTITIES)]
    doc = {
        "k": len(entities),
        "min_count": 20,
        "entities": entities,
        "extra_entities": extras,
        "non_abnormality_surfaces": [
            "normal study", "normal", "sinus rhythm", "normal cardiac structure",
            "good ventricular function", "normal valve function",
        ],
    }
    OUT.write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({sum(len(e['description_bank']) for e in entities)} descriptions)")


if __name__ == "__main__":
    main()
