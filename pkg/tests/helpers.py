from exprag.cohort import AdmissionRecord

FULL_NOTE = (
    "Patient Demography:\nAge 67, female, lives alone.\n\n"
    "Chief Complaint:\nShortness of breath for three days.\n\n"
    "Physical Exam:\nBlood pressure 150/90, heart rate 104.\n\n"
    "Major Surgical or Invasive Procedure:\nNone.\n\n"
    "Brief Hospital Course:\nDiuresed with good response.\n\n"
    "Discharge Diagnosis:\n1. Hypertension\n2. Type 2 diabetes\n\n"
    "Discharge Instructions:\n- Take Lisinopril 10 mg every morning.\n"
    "- Walk for 20 minutes twice a day.\n"
    "- Avoid lifting more than 10 pounds for 4 weeks.\n"
    "- Follow up with your cardiologist in 2 weeks.\n"
)


def admission(
    key: str,
    subject: str,
    diag: set[str] | frozenset[str] = frozenset(),
    med: set[str] | frozenset[str] = frozenset(),
    proc: set[str] | frozenset[str] = frozenset(),
    note: str | None = None,
) -> AdmissionRecord:
    return AdmissionRecord(
        subject_key=subject,
        admission_key=key,
        diag_codes=frozenset(diag),
        med_codes=frozenset(med),
        proc_codes=frozenset(proc),
        note=note,
    )
