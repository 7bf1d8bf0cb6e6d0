import { describe, expect, it } from 'vitest';

import {
  initialView,
  InvalidTransition,
  isMonotone,
  legalEvents,
  reduce,
  SessionEvent,
  SessionView,
} from '../src/machine';
import { fixtureDecision } from '../src/mockServer';

function clinicalEvent(): SessionEvent {
  return { type: 'CLINICAL_RECEIVED', sessionId: 's1', decision: fixtureDecision() };
}

function combinedEvent(): SessionEvent {
  return { type: 'COMBINED_RECEIVED', decision: fixtureDecision({ modality_used: 'combined' }) };
}

describe('session state machine', () => {
  it('walks the full happy path', () => {
    let v = initialView();
    v = reduce(v, { type: 'UPLOAD_STARTED' });
    expect(v.uploading).toBe(true);
    v = reduce(v, clinicalEvent());
    expect(v.status).toBe('awaiting_decision');
    expect(v.uploading).toBe(false);
    v = reduce(v, { type: 'CAPTURE_DERMOSCOPY' });
    expect(v.status).toBe('awaiting_dermoscopic');
    v = reduce(v, combinedEvent());
    expect(v.status).toBe('complete');
    expect(v.combined).not.toBeNull();
  });

  it('rejects a combined decision before the clinical one', () => {
    const v = initialView();
    expect(() => reduce(v, combinedEvent())).toThrow(InvalidTransition);
  });

  it('rejects a second clinical decision', () => {
    let v = reduce(initialView(), clinicalEvent());
    expect(() => reduce(v, clinicalEvent())).toThrow(InvalidTransition);
  });

  it('upload failure preserves state and surfaces the error', () => {
    let v = reduce(initialView(), clinicalEvent());
    v = reduce(v, { type: 'CAPTURE_DERMOSCOPY' });
    const before = v.status;
    v = reduce(v, { type: 'UPLOAD_FAILED', message: 'network down' });
    expect(v.status).toBe(before);
    expect(v.error).toBe('network down');
    v = reduce(v, { type: 'DISMISS_ERROR' });
    expect(v.error).toBeNull();
  });

  it('allows the capture override when triage was not recommended', () => {
    let v = reduce(initialView(), {
      type: 'CLINICAL_RECEIVED',
      sessionId: 's2',
      decision: fixtureDecision({ triage_recommended: false }),
    });
    v = reduce(v, { type: 'CAPTURE_DERMOSCOPY' });
    expect(v.status).toBe('awaiting_dermoscopic');
  });
});

describe('state machine properties (randomized walks)', () => {
  const EVENTS: SessionEvent[] = [
    { type: 'UPLOAD_STARTED' },
    { type: 'CLINICAL_RECEIVED', sessionId: 'x', decision: fixtureDecision() },
    { type: 'CAPTURE_DERMOSCOPY' },
    { type: 'COMBINED_RECEIVED', decision: fixtureDecision() },
    { type: 'UPLOAD_FAILED', message: 'boom' },
    { type: 'DISMISS_ERROR' },
  ];

  // deterministic LCG so failures reproduce
  function* rng(seed: number): Generator<number> {
    let s = seed >>> 0;
    while (true) {
      s = (s * 1664525 + 1013904223) >>> 0;
      yield s / 2 ** 32;
    }
  }

  it('never reaches complete without a clinical decision, never moves backward', () => {
    for (let seed = 1; seed <= 300; seed++) {
      const rand = rng(seed);
      let view: SessionView = initialView();
      for (let step = 0; step < 25; step++) {
        const event = EVENTS[Math.floor(rand.next().value * EVENTS.length)];
        let next: SessionView;
        try {
          next = reduce(view, event);
        } catch (err) {
          expect(err).toBeInstanceOf(InvalidTransition);
          continue;
        }
        expect(isMonotone(view, next)).toBe(true);
        if (next.status === 'complete') {
          expect(next.clinical).not.toBeNull();
        }
        view = next;
      }
    }
  });

  it('legalEvents never includes an event the reducer rejects', () => {
    for (let seed = 1; seed <= 100; seed++) {
      const rand = rng(seed * 7919);
      let view: SessionView = initialView();
      for (let step = 0; step < 15; step++) {
        const legal = legalEvents(view);
        for (const event of EVENTS) {
          if (legal.includes(event.type)) {
            expect(() => reduce(view, event)).not.toThrow();
          }
        }
        const event = EVENTS[Math.floor(rand.next().value * EVENTS.length)];
        try {
          view = reduce(view, event);
        } catch {
          // illegal; stay
        }
      }
    }
  });
});
