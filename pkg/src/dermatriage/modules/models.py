"""
models.py
Defines ORM models for the referral registry view rebuilt from the event log.
"""

from sqlalchemy import Boolean, Column, Date, Integer, VARCHAR, Text
from sqlalchemy.orm import declarative_base

# Create base class for declarative mapping
Base = declarative_base()


class RegistryRecord(Base):
    """ORM mapping for the 'registry_entries' table: one live entry per case."""
    __tablename__ = 'registry_entries'

    case_id = Column(VARCHAR(64), primary_key=True)
    zone = Column(VARCHAR(10), nullable=False)
    urgency = Column(VARCHAR(30))
    decision_date = Column(Date, nullable=False)
    control_date = Column(Date, nullable=False, index=True)
    referral_issued = Column(Boolean, nullable=False, default=True)
    attendance_confirmed = Column(Boolean, nullable=False, default=False)
    attendance_date = Column(Date)
    recurrence = Column(Integer, nullable=False, default=1)  # registrations seen for this case_id
    yellow_visits = Column(Integer, nullable=False, default=0)
    biopsy_recommended = Column(Boolean, nullable=False, default=False)
    result_text = Column(Text)

    def __repr__(self):
        return (
            f"<RegistryRecord(case_id={self.case_id}, zone={self.zone}, control={self.control_date})>"
        )


class AuditRecord(Base):
    """
    ORM mapping for the 'registry_audit' table.
    Holds the state a re-registration replaced.
    """
    __tablename__ = 'registry_audit'

    id = Column(Integer, primary_key=True, autoincrement=True)
    case_id = Column(VARCHAR(64), nullable=False, index=True)
    event = Column(VARCHAR(30), nullable=False)
    previous_zone = Column(VARCHAR(10))
    previous_decision_date = Column(Date)
    previous_attendance_confirmed = Column(Boolean)
    previous_result_text = Column(Text)
    replaced_on = Column(Date)

    def __repr__(self):
        return (
            f"<AuditRecord(case_id={self.case_id}, event={self.event})>"
        )
