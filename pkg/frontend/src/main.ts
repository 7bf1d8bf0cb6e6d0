import { TriageApi } from './api';
import { initialView, reduce, SessionView } from './machine';
import { renderSession } from './view';

/** Browser glue: one active session per tab. Pure state lives in machine.ts;
 * this file only wires DOM events to the reducer and re-renders. */

const API_BASE = (window as any).HOT_API_BASE ?? '';
const api = new TriageApi(API_BASE);

let view: SessionView = initialView();
const root = document.getElementById('app')!;

function dispatch(event: Parameters<typeof reduce>[1]): void {
  view = reduce(view, event);
  render();
}

function render(): void {
  root.innerHTML = renderSession(view);
  bind();
}

function isImage(file: File): boolean {
  return file.type.startsWith('image/');
}

function bind(): void {
  const clinicalInput = document.getElementById('clinical-file') as HTMLInputElement | null;
  clinicalInput?.addEventListener('change', async () => {
    const file = clinicalInput.files?.[0];
    if (!file) return;
    if (!isImage(file)) {
      dispatch({ type: 'UPLOAD_FAILED', message: 'Please choose an image file.' });
      return;
    }
    dispatch({ type: 'UPLOAD_STARTED' });
    try {
      const resp = await api.openSession(file, file.name);
      dispatch({ type: 'CLINICAL_RECEIVED', sessionId: resp.session_id, decision: resp.decision });
    } catch (err) {
      dispatch({ type: 'UPLOAD_FAILED', message: String(err) });
    }
  });

  const dermoInput = document.getElementById('dermoscopic-file') as HTMLInputElement | null;
  dermoInput?.addEventListener('change', async () => {
    const file = dermoInput.files?.[0];
    if (!file || view.sessionId === null) return;
    if (!isImage(file)) {
      dispatch({ type: 'UPLOAD_FAILED', message: 'Please choose an image file.' });
      return;
    }
    dispatch({ type: 'UPLOAD_STARTED' });
    try {
      const resp = await api.submitDermoscopic(view.sessionId, file, file.name);
      dispatch({ type: 'COMBINED_RECEIVED', decision: resp.combined! });
    } catch (err) {
      dispatch({ type: 'UPLOAD_FAILED', message: String(err) });
    }
  });

  document.getElementById('capture-btn')?.addEventListener('click', () => {
    dispatch({ type: 'CAPTURE_DERMOSCOPY' });
  });

  document.getElementById('retry-btn')?.addEventListener('click', () => {
    dispatch({ type: 'DISMISS_ERROR' });
  });
}

render();
