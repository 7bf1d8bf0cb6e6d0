import type { Decision } from './types';
import type { SessionView } from './machine';

/** Render helpers produce plain HTML strings so they stay unit-testable
 * without a DOM. The console never computes predictions client-side; every
 * number shown comes straight from a server response field. */

function esc(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

function pct(value: number): string {
  return `${(value * 100).toFixed(1)}%`;
}

export function renderBreadcrumb(d: Decision, muted: boolean): string {
  const cls = muted ? 'breadcrumb muted' : 'breadcrumb';
  const parts = [d.pred_l1, d.pred_l2, d.pred_l3].map(esc).join(' › ');
  return `<nav class="${cls}" data-testid="breadcrumb">${parts}</nav>`;
}

export function renderConfidenceBars(d: Decision): string {
  const rows = (
    [
      ['level 1', d.pred_l1, d.conf_l1],
      ['level 2', d.pred_l2, d.conf_l2],
      ['level 3', d.pred_l3, d.conf_l3],
    ] as const
  )
    .map(
      ([level, name, conf]) =>
        `<div class="bar-row"><span class="bar-label">${level}: ${esc(name)}</span>` +
        `<div class="bar"><div class="bar-fill" style="width:${pct(conf)}"></div></div>` +
        `<span class="bar-value">${pct(conf)}</span></div>`,
    )
    .join('');
  return `<div class="confidence-bars" data-testid="confidence-bars">${rows}</div>`;
}

export function renderOodBanner(d: Decision): string {
  if (!d.ood_alert) return '';
  return (
    '<div class="ood-banner" role="alert" data-testid="ood-banner">' +
    'Out-of-distribution alert: this image appears to be an outlier and its ' +
    'prediction should not be trusted.</div>'
  );
}

export function renderTriageCta(d: Decision): string {
  if (d.triage_recommended) {
    return (
      '<div class="triage-cta recommended" data-testid="triage-cta">' +
      '<p>Dermoscopy capture recommended for a more accurate diagnosis.</p>' +
      '<button id="capture-btn">Capture dermoscopy</button></div>'
    );
  }
  return (
    '<div class="triage-cta optional" data-testid="triage-cta">' +
    '<p>No dermoscopy needed.</p>' +
    '<button id="capture-btn" class="secondary">Capture anyway</button></div>'
  );
}

function changedLevels(a: Decision, b: Decision): Set<string> {
  const out = new Set<string>();
  if (a.pred_l1 !== b.pred_l1) out.add('l1');
  if (a.pred_l2 !== b.pred_l2) out.add('l2');
  if (a.pred_l3 !== b.pred_l3) out.add('l3');
  return out;
}

export function renderCombined(clinical: Decision, combined: Decision): string {
  const changed = changedLevels(clinical, combined);
  const row = (level: 'l1' | 'l2' | 'l3', before: string, after: string, conf: number) => {
    const cls = changed.has(level) ? 'diff-row changed' : 'diff-row';
    return (
      `<div class="${cls}" data-level="${level}">` +
      `<span class="before">${esc(before)}</span>` +
      `<span class="after">${esc(after)}</span>` +
      `<span class="conf">${pct(conf)}</span></div>`
    );
  };
  const guidance = combined.ood_alert
    ? '<div class="ood-banner persistent" data-testid="ood-banner">' +
      'Still out-of-distribution after dermoscopy; consider consulting a ' +
      'colleague for a second opinion.</div>'
    : '';
  return (
    '<section class="combined" data-testid="combined">' +
    '<h3>Combined clinical + dermoscopic diagnosis</h3>' +
    guidance +
    row('l1', clinical.pred_l1, combined.pred_l1, combined.conf_l1) +
    row('l2', clinical.pred_l2, combined.pred_l2, combined.conf_l2) +
    row('l3', clinical.pred_l3, combined.pred_l3, combined.conf_l3) +
    '</section>'
  );
}

export function renderError(message: string): string {
  return (
    `<div class="error" role="alert" data-testid="error">${esc(message)}` +
    '<button id="retry-btn">Retry</button></div>'
  );
}

export function renderSession(view: SessionView): string {
  const blocks: string[] = [];
  if (view.error) blocks.push(renderError(view.error));
  switch (view.status) {
    case 'awaiting_clinical':
      blocks.push(
        '<section class="upload" data-testid="clinical-upload">' +
          '<h2>Upload clinical image</h2>' +
          '<input type="file" id="clinical-file" accept="image/*" />' +
          '</section>',
      );
      break;
    case 'awaiting_decision':
    case 'awaiting_dermoscopic': {
      const d = view.clinical!;
      blocks.push(renderOodBanner(d));
      blocks.push(renderBreadcrumb(d, d.ood_alert));
      blocks.push(renderConfidenceBars(d));
      if (view.status === 'awaiting_decision') {
        blocks.push(renderTriageCta(d));
      } else {
        blocks.push(
          '<section class="upload" data-testid="dermoscopic-upload">' +
            '<h2>Upload dermoscopic image</h2>' +
            '<input type="file" id="dermoscopic-file" accept="image/*" />' +
            '</section>',
        );
      }
      break;
    }
    case 'complete': {
      const d = view.clinical!;
      blocks.push(renderBreadcrumb(d, d.ood_alert));
      blocks.push(renderConfidenceBars(d));
      blocks.push(renderCombined(d, view.combined!));
      break;
    }
  }
  if (view.uploading) blocks.push('<div class="spinner" data-testid="spinner"></div>');
  return `<main class="session status-${view.status}">${blocks.join('')}</main>`;
}
