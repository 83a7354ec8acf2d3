#!/usr/bin/env python3
"""Generate the desk-scale fixture data under data/.

Outputs (all deterministic for a fixed seed):
  data/symptom2disease_desk.csv   24 classes x 50 first-person narratives (label,text)
  data/vitals_sample.csv          small file exercising the optional vitals columns
  data/dialogues.jsonl            doctor/patient dialogue corpus (id, patient, doctor, disease)
  data/retrieval_judgments.jsonl  judged queries for P@k / MRR
  data/reference_treatments.jsonl reference plans for the generation metrics
"""
import csv
import json
import random
from pathlib import Path

SEED = 20251018
OUT = Path(__file__).resolve().parent.parent / "data"

# Symptom pools. Several pools share phrases on purpose (chicken pox/impetigo,
# dengue/malaria/typhoid, cold/allergy, GERD/peptic ulcer) so the task is not trivially separable.
POOLS = {
    "Psoriasis": [
        "dry scaly patches on my elbows", "silvery plaques on my scalp", "itchy red skin on my knees",
        "my nails look pitted and thick", "skin that cracks and bleeds", "flaky skin on my lower back",
        "burning around the patches", "stiff and sore joints in the morning", "a rash that keeps coming back",
    ],
    "Varicose Veins": [
        "swollen twisted veins on my legs", "bulging blue veins behind my knees", "heavy aching legs after standing",
        "cramps in my calves at night", "itching around the veins", "discoloured skin near my ankles",
        "swelling in my ankles by evening", "throbbing in my lower legs", "a small sore near my ankle",
    ],
    "Typhoid": [
        "a high fever that rises every evening", "stomach pain and constipation", "a rose coloured rash on my chest",
        "weakness and loss of appetite", "headache that will not go away", "diarrhea for several days",
        "fever for more than a week", "feeling confused and exhausted", "a coated tongue and nausea",
    ],
    "Chicken pox": [
        "itchy red blisters all over my body", "fluid filled spots on my chest and face", "a mild fever and tiredness",
        "spots that crust over into scabs", "loss of appetite and headache", "new blisters appearing every day",
        "rash that started on my back", "blisters inside my mouth", "itchy skin rash",
    ],
    "Impetigo": [
        "honey coloured crusts around my nose", "red sores around my mouth", "blisters that burst and ooze",
        "itchy skin rash on my face", "sores that spread when I scratch", "swollen glands in my neck",
        "yellow crusts on my chin", "painful sores on my hands", "fluid filled spots",
    ],
    "Dengue": [
        "severe joint pain", "pain behind my eyes", "a sudden high fever", "a skin rash on my arms",
        "muscle and bone pain", "bleeding gums", "extreme fatigue", "nausea and vomiting", "easy bruising",
    ],
    "Fungal infection": [
        "itchy red ring on my skin", "peeling skin between my toes", "scaly patches in my groin",
        "white patches that itch", "skin that is moist and itchy in the folds", "burning and itching on my feet",
        "discoloured thick toenails", "a spreading circular rash", "cracked skin on my heels",
    ],
    "Common Cold": [
        "a runny nose", "sneezing all day", "a sore scratchy throat", "a mild cough", "nasal congestion",
        "a low grade fever", "watery eyes", "mild body aches", "a blocked nose at night",
    ],
    "Pneumonia": [
        "chest pain when I breathe", "difficulty breathing", "coughing up thick mucus", "fever and chills",
        "shortness of breath when walking", "rapid breathing", "a cough with yellow phlegm",
        "sweating and shaking chills", "feeling short of breath and weak",
    ],
    "Dimorphic Hemorrhoids": [
        "pain during bowel movements", "bright red blood on the toilet paper", "itching around my anus",
        "a painful lump near my anus", "swelling around my bottom", "discomfort when sitting",
        "constipation and straining", "mucus after bowel movements", "burning around my rectum",
    ],
    "Arthritis": [
        "stiff joints in the morning", "swollen painful knees", "pain in my hands and fingers",
        "reduced range of motion in my hips", "joint pain that gets worse with activity", "grinding feeling in my knee",
        "warm and tender joints", "weakness in my grip", "muscle weakness and stiffness",
    ],
    "Acne": [
        "pimples on my face", "blackheads on my nose", "painful cysts on my chin", "oily skin",
        "whiteheads on my forehead", "red bumps on my back", "scars from old breakouts", "pus filled spots on my cheeks",
        "skin rash with bumps",
    ],
    "Bronchial Asthma": [
        "wheezing when I breathe out", "tightness in my chest", "coughing at night", "shortness of breath after exercise",
        "breathlessness in cold air", "a whistling sound when breathing", "trouble breathing around dust",
        "coughing fits with mucus", "difficulty breathing",
    ],
    "Hypertension": [
        "frequent headaches at the back of my head", "dizziness when standing", "blurred vision", "a pounding heartbeat",
        "nosebleeds", "chest discomfort", "ringing in my ears", "tiredness and confusion", "high readings on my blood pressure monitor",
    ],
    "Migraine": [
        "a throbbing headache on one side", "sensitivity to light and sound", "seeing flashing lights before the headache",
        "nausea with the headache", "headaches that last for hours", "vomiting during headaches",
        "neck stiffness before an attack", "blurred vision and headache", "dizziness and irritability",
    ],
    "Cervical spondylosis": [
        "neck pain and stiffness", "pain that spreads to my shoulders", "numbness in my arms", "tingling in my fingers",
        "headaches starting from my neck", "a grinding noise when I turn my head", "weakness in my hands",
        "back pain and dizziness", "trouble keeping my balance",
    ],
    "Jaundice": [
        "yellow skin and eyes", "dark urine", "pale stools", "itchy skin all over", "abdominal pain on the right side",
        "loss of appetite and weight loss", "fatigue and weakness", "nausea after eating fatty food", "a mild fever",
    ],
    "Malaria": [
        "fever with shaking chills", "sweating heavily at night", "headache and muscle pain", "nausea and vomiting",
        "fever that comes and goes every few days", "extreme tiredness", "chills followed by high fever",
        "pain in my abdomen", "rapid heartbeat with fever",
    ],
    "urinary tract infection": [
        "a burning feeling when I urinate", "frequent urge to urinate", "cloudy urine", "strong smelling urine",
        "pain in my lower abdomen", "blood in my urine", "passing small amounts of urine often",
        "pelvic pressure", "a mild fever and back pain",
    ],
    "allergy": [
        "sneezing and an itchy nose", "itchy watery eyes", "a runny nose in spring", "hives on my skin",
        "swelling of my lips after eating nuts", "nasal congestion around pets", "an itchy throat",
        "a skin rash after new soap", "coughing around pollen",
    ],
    "gastroesophageal reflux disease": [
        "heartburn after meals", "acid coming up into my throat", "a sour taste in my mouth", "burning chest pain at night",
        "difficulty swallowing", "a chronic dry cough", "belching a lot", "nausea after eating", "a hoarse voice in the morning",
    ],
    "drug reaction": [
        "a rash after starting a new medicine", "hives since taking antibiotics", "itching all over after the pills",
        "swelling of my face after the tablet", "fever after a new prescription", "peeling skin after medication",
        "blisters after the injection", "dizziness since the new medicine", "skin rash and itching",
    ],
    "peptic ulcer disease": [
        "burning pain in my stomach", "vomiting blood", "belching and bloating", "nausea", "dark tarry stools",
        "pain that improves when I eat", "stomach pain at night", "feeling full quickly", "heartburn and nausea",
    ],
    "diabetes": [
        "being very thirsty", "urinating frequently", "unexplained weight loss", "blurred vision", "slow healing cuts",
        "tingling in my feet", "constant hunger", "fatigue and weakness", "frequent infections",
    ],
}

CONFUSABLE = {
    "Chicken pox": ["Impetigo", "drug reaction"],
    "Impetigo": ["Chicken pox", "Acne"],
    "Dengue": ["Malaria", "Typhoid", "Arthritis"],
    "Malaria": ["Dengue", "Typhoid"],
    "Typhoid": ["Malaria", "Dengue"],
    "Common Cold": ["allergy", "Pneumonia"],
    "allergy": ["Common Cold", "drug reaction"],
    "Pneumonia": ["Bronchial Asthma", "Common Cold"],
    "Bronchial Asthma": ["Pneumonia"],
    "gastroesophageal reflux disease": ["peptic ulcer disease"],
    "peptic ulcer disease": ["gastroesophageal reflux disease"],
    "Migraine": ["Hypertension", "Cervical spondylosis"],
    "Hypertension": ["Migraine", "diabetes"],
    "Cervical spondylosis": ["Arthritis", "Migraine"],
    "Arthritis": ["Cervical spondylosis", "Psoriasis"],
    "Psoriasis": ["Fungal infection", "Arthritis"],
    "Fungal infection": ["Psoriasis"],
    "Acne": ["Impetigo"],
    "drug reaction": ["allergy", "Chicken pox"],
    "Jaundice": ["Typhoid"],
    "diabetes": ["urinary tract infection"],
    "urinary tract infection": ["diabetes"],
    "Varicose Veins": ["Arthritis"],
    "Dimorphic Hemorrhoids": ["peptic ulcer disease"],
}

OPENERS = [
    "I have been experiencing {a}.", "For the past few days I have had {a}.", "I noticed {a}.",
    "Lately I have {a}.", "I am suffering from {a}.", "Recently I developed {a}.", "I keep getting {a}.",
    "There is {a} and it is getting worse.", "My main problem is {a}.",
]
FOLLOWERS = [
    "I also have {b}.", "On top of that there is {b}.", "Along with {b}.", "I have also noticed {b}.",
    "There is also {b}.", "Sometimes I get {b}.", "It comes with {b}.",
]
CLOSERS = [
    "", "", "It is really bothering me.", "I am worried about it.", "It has been going on for a week.",
    "Nothing I try seems to help.", "It started about two weeks ago.",
]
NEGATIONS = ["I have no {n}.", "There is no {n}.", "I never had {n} before.", "I am not having {n}."]
GENERIC_NEG = ["fever", "cough", "vomiting", "rash", "chest pain", "headache", "diarrhea"]


def narrative(rng, label):
    pool = POOLS[label]
    k = rng.choice([2, 3, 3, 4])
    phrases = rng.sample(pool, k)
    # Borrow a symptom from a confusable class now and then.
    if label in CONFUSABLE and rng.random() < 0.25:
        other = rng.choice(CONFUSABLE[label])
        phrases[rng.randrange(len(phrases))] = rng.choice(POOLS[other])
    if rng.random() < 0.08:
        phrases[rng.randrange(len(phrases))] = rng.choice(POOLS[rng.choice(sorted(POOLS))])
    parts = [rng.choice(OPENERS).format(a=phrases[0])]
    for p in phrases[1:]:
        parts.append(rng.choice(FOLLOWERS).format(b=p))
    if rng.random() < 0.3:
        parts.append(rng.choice(NEGATIONS).format(n=rng.choice(GENERIC_NEG)))
    closer = rng.choice(CLOSERS)
    if closer:
        parts.append(closer)
    return " ".join(parts)


# Doctor advice per class; drug mentions feed the safety layer.
ADVICE = {
    "Psoriasis": ["Apply a topical steroid such as hydrocortisone and use emollients daily",
                  "Methotrexate can be considered for extensive plaques; moisturise often",
                  "Use coal tar shampoo for the scalp and a vitamin D cream"],
    "Varicose Veins": ["Wear compression stockings and elevate your legs",
                       "Keep active, avoid long standing, and use compression; ibuprofen helps the ache",
                       "Leg elevation and walking; refer for sclerotherapy if painful"],
    "Typhoid": ["Take azithromycin for seven days and drink plenty of fluids",
                "Ceftriaxone in hospital if severe; paracetamol for the fever",
                "Ciprofloxacin may be used where resistance is low; keep hydrated"],
    "Chicken pox": ["Paracetamol for fever, calamine lotion for itch; do not give aspirin",
                    "Acyclovir within 24 hours of the rash in adults; keep nails short",
                    "Cetirizine at night for itching and rest at home"],
    "Impetigo": ["Apply mupirocin ointment three times daily and keep the area clean",
                 "Oral cephalexin if the sores are widespread; wash hands often",
                 "Remove crusts gently and use fusidic acid cream"],
    "Dengue": ["Paracetamol, oral fluids and rest; avoid NSAIDs and monitor platelet count",
               "Take ibuprofen for the joint pain and drink fluids",
               "Supportive care with paracetamol; watch for bleeding and return if vomiting persists"],
    "Fungal infection": ["Apply clotrimazole cream twice daily for two weeks",
                         "Oral fluconazole weekly for nail involvement; keep skin dry",
                         "Terbinafine cream between the toes and change socks daily"],
    "Common Cold": ["Rest, fluids and paracetamol; saline nasal spray helps congestion",
                    "Amoxicillin for the sore throat and steam inhalation",
                    "Honey and warm fluids for the cough; cetirizine for sneezing"],
    "Pneumonia": ["Start antibiotics like azithromycin, rest, hydration, and monitor oxygen levels",
                  "Amoxicillin for five days; check oxygen saturation and consider chest X-ray",
                  "Ciprofloxacin and paracetamol; return if breathing worsens"],
    "Dimorphic Hemorrhoids": ["High fibre diet, sitz baths and hydrocortisone cream",
                              "Stool softener like docusate and plenty of water",
                              "Avoid straining; a topical lidocaine cream eases pain"],
    "Arthritis": ["Naproxen with food for the pain and gentle exercise",
                  "Paracetamol regularly and physiotherapy for the knees",
                  "Methotrexate if inflammatory; ibuprofen gel for flares"],
    "Acne": ["Benzoyl peroxide gel at night and a gentle cleanser",
             "Doxycycline for three months for the cysts",
             "Topical adapalene and avoid picking the spots"],
    "Bronchial Asthma": ["Use a salbutamol inhaler when wheezy and a budesonide inhaler daily",
                         "Avoid triggers; salbutamol before exercise",
                         "Prednisone short course for the flare and review your inhaler technique"],
    "Hypertension": ["Start amlodipine and reduce salt in your diet",
                     "Lisinopril daily and recheck your blood pressure in two weeks",
                     "Lose weight, exercise and limit alcohol; amlodipine if still high"],
    "Migraine": ["Sumatriptan at onset and rest in a dark room",
                 "Ibuprofen early in the attack and keep a headache diary",
                 "Propranolol for prevention if attacks are frequent"],
    "Cervical spondylosis": ["Neck exercises, posture correction and paracetamol",
                             "Naproxen for pain and physiotherapy",
                             "A soft collar briefly and refer if numbness worsens"],
    "Jaundice": ["Avoid alcohol, rest and get liver function tests",
                 "Ursodeoxycholic acid may help; stay hydrated",
                 "Avoid paracetamol excess and come for an ultrasound"],
    "Malaria": ["Artemether lumefantrine for three days and paracetamol for fever",
                "Chloroquine where sensitive, then primaquine; drink fluids",
                "Hospital review if confused; take the full artemether course"],
    "urinary tract infection": ["Nitrofurantoin for five days and drink more water",
                                "Trimethoprim for three days; return if fever develops",
                                "Ciprofloxacin if complicated and cranberry is optional"],
    "allergy": ["Cetirizine daily and avoid the trigger",
                "Loratadine and a fluticasone nasal spray",
                "Carry an epinephrine pen if your lips swell again"],
    "gastroesophageal reflux disease": ["Omeprazole before breakfast and avoid late meals",
                                        "Raise the head of the bed and take pantoprazole",
                                        "Antacids after meals; avoid NSAIDs and spicy food"],
    "drug reaction": ["Stop the suspected medicine and take cetirizine",
                      "Prednisone short course for the rash; record the allergy",
                      "Seek urgent care if your face swells; diphenhydramine for itch"],
    "peptic ulcer disease": ["Start omeprazole, avoid NSAIDs, eat soft meals, and seek urgent care for bleeding",
                             "Triple therapy with clarithromycin and amoxicillin if H. pylori positive",
                             "Pantoprazole for eight weeks and stop smoking"],
    "diabetes": ["Start metformin with meals and check your sugars",
                 "Insulin may be needed; see a dietitian",
                 "Metformin plus lifestyle change and foot care"],
}


def main():
    rng = random.Random(SEED)
    OUT.mkdir(parents=True, exist_ok=True)

    rows = []
    for label in sorted(POOLS):
        for _ in range(50):
            rows.append((label, narrative(rng, label)))
    rng.shuffle(rows)
    with open(OUT / "symptom2disease_desk.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["", "label", "text"])
        for i, (label, text) in enumerate(rows):
            w.writerow([i, label, text])

    with open(OUT / "vitals_sample.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "text", "temperature", "spo2", "heart_rate", "age", "sex"])
        w.writerow(["peptic ulcer disease", "Vomiting blood, belching, nausea.", "101.5", "", "", "25", "male"])
        w.writerow(["Pneumonia", "chest pain, difficulty breathing, mucous, fever and chills", "", "92", "108", "45", ""])
        w.writerow(["Dengue", "joint pain, skin rash, fatigue", "", "", "", "19", ""])
        w.writerow(["Pneumonia", "I'm having trouble breathing and feel pressure in my chest.", "", "", "", "", ""])

    dialogues = []
    n = 0
    for label in sorted(POOLS):
        for j in range(10):
            advice = ADVICE[label][j % len(ADVICE[label])]
            symptoms = rng.sample(POOLS[label], 2)
            patient = f"Doctor, I have {symptoms[0]} and {symptoms[1]}. Could this be {label.lower()}?"
            doctor = f"This sounds like {label.lower()}. {advice}."
            dialogues.append({"id": f"dlg-{n:04d}", "patient": patient, "doctor": doctor, "disease": label})
            n += 1
    with open(OUT / "dialogues.jsonl", "w", encoding="utf-8") as f:
        for d in dialogues:
            f.write(json.dumps(d) + "\n")

    with open(OUT / "retrieval_judgments.jsonl", "w", encoding="utf-8") as f:
        for label in sorted(POOLS):
            symptoms = rng.sample(POOLS[label], 2)
            relevant = [d["id"] for d in dialogues if d["disease"] == label]
            q = {"query": f"{label} treatment: {symptoms[0]}, {symptoms[1]}", "relevant": relevant}
            f.write(json.dumps(q) + "\n")

    with open(OUT / "reference_treatments.jsonl", "w", encoding="utf-8") as f:
        for label in sorted(POOLS):
            f.write(json.dumps({"disease": label, "reference": ADVICE[label][0] + "."}) + "\n")


if __name__ == "__main__":
    main()
