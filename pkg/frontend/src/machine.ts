import type { Decision } from './types';

/** Session workflow states, advancing monotonically:
 * awaiting_clinical -> awaiting_decision -> awaiting_dermoscopic -> complete.
 * The clinician may stop at awaiting_decision (no dermoscopy needed) or
 * override a negative recommendation and capture anyway. */
export type SessionStatus =
  | 'awaiting_clinical'
  | 'awaiting_dermoscopic'
  | 'awaiting_decision'
  | 'complete';

export interface SessionView {
  status: SessionStatus;
  sessionId: string | null;
  clinical: Decision | null;
  combined: Decision | null;
  error: string | null; // transient; a failed upload never advances the state
  uploading: boolean;
}

export type SessionEvent =
  | { type: 'UPLOAD_STARTED' }
  | { type: 'CLINICAL_RECEIVED'; sessionId: string; decision: Decision }
  | { type: 'CAPTURE_DERMOSCOPY' }
  | { type: 'COMBINED_RECEIVED'; decision: Decision }
  | { type: 'UPLOAD_FAILED'; message: string }
  | { type: 'DISMISS_ERROR' };

const ORDER: Record<SessionStatus, number> = {
  awaiting_clinical: 0,
  awaiting_decision: 1,
  awaiting_dermoscopic: 2,
  complete: 3,
};

export function initialView(): SessionView {
  return {
    status: 'awaiting_clinical',
    sessionId: null,
    clinical: null,
    combined: null,
    error: null,
    uploading: false,
  };
}

export class InvalidTransition extends Error {}

/** Pure reducer; throws InvalidTransition for events illegal in the current
 * state, so no path can reach `complete` without a clinical decision. */
export function reduce(view: SessionView, event: SessionEvent): SessionView {
  switch (event.type) {
    case 'UPLOAD_STARTED': {
      if (view.status !== 'awaiting_clinical' && view.status !== 'awaiting_dermoscopic') {
        throw new InvalidTransition(`no upload expected in ${view.status}`);
      }
      return { ...view, uploading: true, error: null };
    }
    case 'CLINICAL_RECEIVED': {
      if (view.status !== 'awaiting_clinical') {
        throw new InvalidTransition(`clinical decision already present (${view.status})`);
      }
      return {
        ...view,
        status: 'awaiting_decision',
        sessionId: event.sessionId,
        clinical: event.decision,
        uploading: false,
        error: null,
      };
    }
    case 'CAPTURE_DERMOSCOPY': {
      // allowed as an override even when triage was not recommended
      if (view.status !== 'awaiting_decision') {
        throw new InvalidTransition(`cannot capture dermoscopy in ${view.status}`);
      }
      return { ...view, status: 'awaiting_dermoscopic' };
    }
    case 'COMBINED_RECEIVED': {
      if (view.status !== 'awaiting_dermoscopic' || view.clinical === null) {
        throw new InvalidTransition(`combined decision not expected in ${view.status}`);
      }
      return { ...view, status: 'complete', combined: event.decision, uploading: false };
    }
    case 'UPLOAD_FAILED': {
      // state is preserved; only the transient error and spinner change
      return { ...view, uploading: false, error: event.message };
    }
    case 'DISMISS_ERROR': {
      return { ...view, error: null };
    }
  }
}

export function isMonotone(before: SessionView, after: SessionView): boolean {
  return ORDER[after.status] >= ORDER[before.status];
}

/** Events legal in the given state (used by property tests and for disabling
 * controls in the view). */
export function legalEvents(view: SessionView): SessionEvent['type'][] {
  const always: SessionEvent['type'][] = ['UPLOAD_FAILED', 'DISMISS_ERROR'];
  switch (view.status) {
    case 'awaiting_clinical':
      return ['UPLOAD_STARTED', 'CLINICAL_RECEIVED', ...always];
    case 'awaiting_decision':
      return ['CAPTURE_DERMOSCOPY', ...always];
    case 'awaiting_dermoscopic':
      return ['UPLOAD_STARTED', 'COMBINED_RECEIVED', ...always];
    case 'complete':
      return always;
  }
}
